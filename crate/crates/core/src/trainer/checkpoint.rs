//! Single-file checkpoint: `RFBP`, u32 version, u32 metadata length, JSON
//! metadata, then little-endian f32 payloads in the order listed in the
//! metadata.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{NetConfig, RfBayesPhysNet};

pub const MAGIC: &[u8; 4] = b"RFBP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: u64,
    /// Every random stream is derived from this seed and the epoch index,
    /// so together they are the generator state.
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Payloads aligned with `meta.tensors`.
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::json("checkpoint metadata", e))?;
        let payload: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.data {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing RFBP magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(body).map_err(|e| bad(format!("metadata: {e}")))?;
        let mut rest = &bytes[12 + len..];
        let want: usize = meta.tensors.iter().map(|t| t.len * 4).sum();
        if rest.len() != want {
            return Err(bad(format!("payload has {} bytes, metadata lists {want}", rest.len())));
        }
        let mut data = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let (head, tail) = rest.split_at(t.len * 4);
            data.push(
                head.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
            rest = tail;
        }
        Ok(Self { meta, data })
    }

    /// Writes through a temporary file and a rename, so an existing
    /// checkpoint is never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn get(&self, name: &str) -> Result<&[f32]> {
        self.meta
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.data[i].as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Rebuilds the network with the stored parameters and statistics.
    pub fn network(&self) -> Result<RfBayesPhysNet> {
        let mut net = RfBayesPhysNet::new(self.meta.net.clone())?;
        load_network_state(self, &mut net)?;
        Ok(net)
    }
}

/// Names and payloads of every parameter and running statistic.
pub(super) fn network_state(net: &RfBayesPhysNet) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> = net
        .params()
        .into_iter()
        .map(|(name, _, t)| (name, t.data().to_vec()))
        .collect();
    for n in net.norms() {
        out.push((format!("{}.running_mean", n.name), n.stats.mean.clone()));
        out.push((format!("{}.running_var", n.name), n.stats.var.clone()));
    }
    out
}

pub(super) fn load_network_state(ckpt: &Checkpoint, net: &mut RfBayesPhysNet) -> Result<()> {
    let names: Vec<String> = net.params().into_iter().map(|(n, _, _)| n).collect();
    for (name, t) in names.iter().zip(net.params_mut()) {
        let src = ckpt.get(name)?;
        if src.len() != t.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {} values, network expects {}",
                src.len(),
                t.len()
            )));
        }
        t.data_mut().copy_from_slice(src);
    }
    for i in 0..net.norms().len() {
        let name = net.norms()[i].name.clone();
        let mean = ckpt.get(&format!("{name}.running_mean"))?.to_vec();
        let var = ckpt.get(&format!("{name}.running_var"))?.to_vec();
        let stats = &mut net.norms_mut()[i].stats;
        if mean.len() != stats.mean.len() || var.len() != stats.var.len() {
            return Err(Error::Checkpoint(format!("{name}: running statistics have the wrong size")));
        }
        stats.mean = mean;
        stats.var = var;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                net: NetConfig::default(),
                train: TrainConfig::default(),
                loss: LossConfig::default(),
                epoch: 3,
                step: 48,
                seed: 7,
                tensors: vec![
                    TensorEntry { name: "a".into(), len: 2 },
                    TensorEntry { name: "b".into(), len: 1 },
                ],
            },
            data: vec![vec![1.5, -0.0], vec![f32::MIN_POSITIVE]],
        }
    }

    #[test]
    fn bytes_roundtrip_and_layout() {
        let c = sample();
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"RFBP");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), c);
        assert_eq!(&b[b.len() - 4..], &f32::MIN_POSITIVE.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("model.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.ckpt")),
            Err(Error::NotFound { .. })
        ));
    }
}
