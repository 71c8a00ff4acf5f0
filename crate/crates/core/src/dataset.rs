//! On-disk dataset format.
//!
//! ```text
//! <root>/manifest.json           {"records": [{"id", "split", "hr_bpm"}]}
//! <root>/<id>/clip.json          {"shape": [3, T, H, W], "dtype": "f32", "fs": 30}
//! <root>/<id>/clip.f32           little-endian f32, C order
//! <root>/<id>/bvp.csv            t_seconds,value
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{cubic_spline_resample, BvpTrace};
use crate::synth::{Split, SynthRecord};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const CLIP_HEADER: &str = "clip.json";
pub const CLIP_DATA: &str = "clip.f32";
pub const BVP_FILE: &str = "bvp.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub shape: [usize; 4],
    pub dtype: String,
    pub fs: f64,
}

impl ClipHeader {
    pub fn payload_bytes(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_bpm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub records: Vec<ManifestEntry>,
}

/// A record of a loaded dataset; clip and pulse are read on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub hr_bpm: Option<f64>,
    pub dir: PathBuf,
    pub header: ClipHeader,
}

impl DatasetRecord {
    pub fn clip_path(&self) -> PathBuf {
        self.dir.join(CLIP_DATA)
    }

    pub fn bvp_path(&self) -> PathBuf {
        self.dir.join(BVP_FILE)
    }

    /// Reads the clip, validating it against its header.
    pub fn load_clip(&self) -> Result<Tensor<f32>> {
        let path = self.clip_path();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let want = self.header.payload_bytes();
        if bytes.len() != want {
            return Err(Error::CorruptDataset {
                path,
                reason: format!(
                    "header shape {:?} needs {want} bytes, payload has {}",
                    self.header.shape,
                    bytes.len()
                ),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptDataset {
                path,
                reason: "payload contains non-finite values".into(),
            });
        }
        Tensor::new(self.header.shape.to_vec(), data)
    }

    /// Reads the pulse trace and resamples it onto the clip's frame times.
    pub fn load_bvp(&self) -> Result<BvpTrace> {
        let path = self.bvp_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let corrupt = |reason: String| Error::CorruptDataset {
            path: path.clone(),
            reason,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t_seconds,value" => {}
            other => return Err(corrupt(format!("expected header t_seconds,value, found {other:?}"))),
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut cols = line.split(',');
            let mut next = || -> Result<f64> {
                cols.next()
                    .and_then(|c| c.trim().parse::<f64>().ok())
                    .ok_or_else(|| corrupt(format!("line {}: expected two numbers, got {line:?}", i + 2)))
            };
            times.push(next()?);
            values.push(next()?);
        }
        let (t_len, fs) = (self.header.shape[1], self.header.fs);
        let targets: Vec<f64> = (0..t_len).map(|i| i as f64 / fs).collect();
        let aligned = if times == targets {
            values
        } else {
            cubic_spline_resample(&times, &values, &targets).map_err(|e| corrupt(e.to_string()))?
        };
        BvpTrace::new(aligned, fs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes one record directory.
pub fn write_record(root: &Path, id: &str, clip: &Tensor<f32>, bvp: &BvpTrace) -> Result<()> {
    let shape: [usize; 4] = clip.shape().try_into().map_err(|_| {
        Error::Dimension(format!("clip must be [C, T, H, W], got {:?}", clip.shape()))
    })?;
    if bvp.len() != shape[1] {
        return Err(Error::Dimension(format!(
            "pulse has {} samples for {} frames",
            bvp.len(),
            shape[1]
        )));
    }
    let dir = root.join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let header = ClipHeader {
        shape,
        dtype: "f32".into(),
        fs: bvp.fs,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("clip header", e))?;
    write_file(&dir.join(CLIP_HEADER), &json)?;
    let mut bytes = Vec::with_capacity(clip.len() * 4);
    for v in clip.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join(CLIP_DATA), &bytes)?;
    // `{}` on f64 prints the shortest representation that round-trips exactly
    let mut csv = String::from("t_seconds,value\n");
    for (t, v) in bvp.times().iter().zip(&bvp.samples) {
        csv.push_str(&format!("{t},{v}\n"));
    }
    write_file(&dir.join(BVP_FILE), csv.as_bytes())
}

/// Writes the records and the manifest under `root`.
pub fn write_dataset(root: &Path, records: &[SynthRecord]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for r in records {
        write_record(root, &r.id, &r.clip, &r.bvp)?;
    }
    let manifest = Manifest {
        records: records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                split: r.split,
                hr_bpm: Some(r.spec.hr_bpm),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    write_file(&root.join(MANIFEST), &json)
}

/// Reads the manifest and every clip header; payloads are loaded lazily.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::CorruptDataset {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in manifest.records {
        if entry.id.is_empty() || entry.id.contains(['/', '\\']) || entry.id.starts_with('.') {
            return Err(Error::CorruptDataset {
                path: mpath,
                reason: format!("invalid record id {:?}", entry.id),
            });
        }
        let dir = root.join(&entry.id);
        let hpath = dir.join(CLIP_HEADER);
        let raw = fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: ClipHeader = serde_json::from_slice(&raw).map_err(|e| Error::CorruptDataset {
            path: hpath.clone(),
            reason: e.to_string(),
        })?;
        if header.dtype != "f32" || !(header.fs > 0.0) {
            return Err(Error::CorruptDataset {
                path: hpath,
                reason: format!("unsupported dtype {:?} or fs {}", header.dtype, header.fs),
            });
        }
        for p in [dir.join(CLIP_DATA), dir.join(BVP_FILE)] {
            if !p.is_file() {
                return Err(Error::NotFound { path: p });
            }
        }
        records.push(DatasetRecord {
            id: entry.id,
            split: entry.split,
            hr_bpm: entry.hr_bpm,
            dir,
            header,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}
