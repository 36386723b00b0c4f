//! Binary checkpoints.
//!
//! Layout: `b"HGFG"`, `u32` format version, `u32` CRC-32 of the payload,
//! then the payload: `u64` header length, a JSON header and the raw
//! little-endian `f32` tensor data addressed by the header's directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::hourglass::{Network, NetworkConfig};
use crate::optim::RmspropState;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Shape4;

const MAGIC: &[u8; 4] = b"HGFG";
pub const FORMAT_VERSION: u32 = 1;

/// Where training stopped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Completed optimizer steps.
    pub step: u64,
    /// Epoch containing the next step.
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub store: ParamStore<f32>,
    pub optimizer: Option<RmspropState<f32>>,
    pub progress: TrainProgress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Buffer,
    RmspropV,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    section: Section,
    shape: [usize; 4],
    /// Offset in `f32` elements from the start of the data area.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<DirEntry>,
    optimizer_step: Option<u64>,
    progress: TrainProgress,
}

impl Checkpoint {
    pub fn new(config: NetworkConfig, store: ParamStore<f32>) -> Self {
        Self {
            config,
            store,
            optimizer: None,
            progress: TrainProgress::default(),
        }
    }

    /// Rebuilds the network structure described by the stored config.
    pub fn network(&self) -> Result<Network> {
        Ok(Network::with_seed::<f32>(&self.config, 0)?.0)
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut push = |name: &str, section, shape: Shape4, values: &[f32]| {
            tensors.push(DirEntry {
                name: name.to_string(),
                section,
                shape: shape.dims(),
                offset: data.len() as u64,
            });
            data.extend_from_slice(values);
        };
        for e in self.store.entries() {
            let section = match e.kind {
                ParamKind::Trainable => Section::Param,
                ParamKind::Buffer => Section::Buffer,
            };
            push(&e.name, section, e.tensor.shape(), e.tensor.data());
        }
        if let Some(opt) = &self.optimizer {
            let ids: Vec<_> = self.store.trainable_ids().collect();
            if ids.len() != opt.v.len() {
                return Err(HgError::config("optimizer state does not match the parameter store"));
            }
            for (id, v) in ids.into_iter().zip(&opt.v) {
                push(self.store.name(id), Section::RmspropV, self.store.tensor(id).shape(), v);
            }
        }
        let header = Header {
            config: self.config.clone(),
            tensors,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            progress: self.progress,
        };
        let json = serde_json::to_vec(&header).map_err(|e| HgError::data(format!("checkpoint header: {e}")))?;
        let mut payload = Vec::with_capacity(8 + json.len() + 4 * data.len());
        payload.extend_from_slice(&(json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&json);
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(12 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(HgError::data("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(HgError::data(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let crc = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let payload = &bytes[12..];
        if crc32fast::hash(payload) != crc {
            return Err(HgError::data("checkpoint checksum mismatch (truncated or corrupted)"));
        }
        if payload.len() < 8 {
            return Err(HgError::data("checkpoint truncated before header"));
        }
        let hlen = u64::from_le_bytes(payload[..8].try_into().unwrap()) as usize;
        let rest = &payload[8..];
        if hlen > rest.len() {
            return Err(HgError::data("checkpoint truncated inside header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| HgError::data(format!("checkpoint header: {e}")))?;
        let raw = &rest[hlen..];
        if raw.len() % 4 != 0 {
            return Err(HgError::data("checkpoint data area is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let (_, mut store) = Network::with_seed::<f32>(&header.config, 0)?;
        let mut filled = vec![false; store.len()];
        let trainable: Vec<_> = store.trainable_ids().collect();
        let mut v: Vec<Option<Vec<f32>>> = vec![None; trainable.len()];
        for t in &header.tensors {
            let shape = Shape4::from_dims(t.shape);
            let start = t.offset as usize;
            let end = start
                .checked_add(shape.numel())
                .filter(|e| *e <= floats.len())
                .ok_or_else(|| HgError::data(format!("tensor {} extends past the data area", t.name)))?;
            let values = &floats[start..end];
            let id = store
                .id(&t.name)
                .ok_or_else(|| HgError::data(format!("checkpoint tensor {} is not part of the network", t.name)))?;
            let expected = store.tensor(id).shape();
            if expected != shape {
                return Err(HgError::data(format!(
                    "tensor {} has shape {shape}, network expects {expected}",
                    t.name
                )));
            }
            let kind = store.entry(id).kind;
            match (t.section, kind) {
                (Section::Param, ParamKind::Trainable) | (Section::Buffer, ParamKind::Buffer) => {
                    store.tensor_mut(id).data_mut().copy_from_slice(values);
                    filled[id.0] = true;
                }
                (Section::RmspropV, ParamKind::Trainable) => {
                    let k = trainable.iter().position(|p| *p == id).expect("trainable");
                    v[k] = Some(values.to_vec());
                }
                _ => {
                    return Err(HgError::data(format!("tensor {} stored in the wrong section", t.name)));
                }
            }
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(HgError::data(format!(
                "checkpoint is missing tensor {}",
                store.entries()[i].name
            )));
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let v = v
                    .into_iter()
                    .enumerate()
                    .map(|(k, v)| {
                        v.ok_or_else(|| {
                            HgError::data(format!(
                                "checkpoint is missing optimizer state for {}",
                                store.name(trainable[k])
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(RmspropState { step, v })
            }
        };
        Ok(Self {
            config: header.config,
            store,
            optimizer,
            progress: header.progress,
        })
    }
}

/// Writes to a sibling temporary file and renames it over `path`, so an
/// interrupted save never leaves a partial checkpoint behind.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref())?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = NetworkConfig::toy();
        let (_, store) = Network::with_seed::<f32>(&cfg, 5).unwrap();
        let mut opt = RmspropState::new(&store);
        for (k, v) in opt.v.iter_mut().enumerate() {
            for (i, x) in v.iter_mut().enumerate() {
                *x = (k * 31 + i) as f32 * 1e-3;
            }
        }
        opt.step = 17;
        Checkpoint {
            config: cfg,
            store,
            optimizer: Some(opt),
            progress: TrainProgress { step: 17, epoch: 2 },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.config, c.config);
        assert_eq!(back.progress, c.progress);
        assert_eq!(back.optimizer, c.optimizer);
        for (a, b) in c.store.entries().iter().zip(back.store.entries()) {
            assert_eq!(a.name, b.name);
            let (x, y): (Vec<u32>, Vec<u32>) = (
                a.tensor.data().iter().map(|v| v.to_bits()).collect(),
                b.tensor.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::decode(cut), Err(HgError::Data(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(Checkpoint::decode(&flipped).unwrap_err().to_string().contains("checksum"));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(Checkpoint::decode(&ver).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::decode(b"nope").is_err());
    }
}
