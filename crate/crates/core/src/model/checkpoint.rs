//! Binary checkpoint container.
//!
//! Layout: one line of compact JSON (format tag, version, model config,
//! training metadata, and the ordered parameter manifest) terminated by
//! `\n`, followed by every parameter's entries as little-endian `f64` in
//! manifest order, row-major.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "tncm-checkpoint";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    meta: TrainingMeta,
    params: Vec<ManifestEntry>,
}

/// A model plus the metadata of the run that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn untrained(model: Model) -> Self {
        Self { model, meta: TrainingMeta::default() }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(w);
        let header = Header {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            meta: self.meta.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|(name, v)| ManifestEntry { name: name.to_string(), shape: [v.nrows(), v.ncols()] })
                .collect(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (_, v) in self.model.params().iter() {
            for x in v.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut rdr = BufReader::new(r);
        let mut line = Vec::new();
        rdr.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header terminator".into()));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])?;
        if header.format != FORMAT_TAG {
            return Err(Error::Format(format!("unexpected format tag `{}`", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        let mut model = Model::new(header.config)?;
        let store = model.params_mut();
        if store.len() != header.params.len() {
            return Err(Error::Format(format!(
                "manifest lists {} parameters, architecture has {}",
                header.params.len(),
                store.len()
            )));
        }
        let mut buf = [0u8; 8];
        for (k, entry) in header.params.iter().enumerate() {
            let id = store
                .id(&entry.name)
                .filter(|id| id.index() == k)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{}` at {k}", entry.name)))?;
            let value = store.get_mut(id);
            if [value.nrows(), value.ncols()] != entry.shape {
                return Err(Error::Format(format!("shape mismatch for `{}`", entry.name)));
            }
            for x in value.iter_mut() {
                rdr.read_exact(&mut buf)
                    .map_err(|_| Error::Format("truncated parameter data".into()))?;
                *x = f64::from_le_bytes(buf);
                if !x.is_finite() {
                    return Err(Error::Format(format!("non-finite entry in `{}`", entry.name)));
                }
            }
        }
        if rdr.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after parameter data".into()));
        }
        Ok(Self { model, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}
