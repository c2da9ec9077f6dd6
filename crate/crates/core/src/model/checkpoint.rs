//! Checkpoint container.
//!
//! ```text
//! magic        8 bytes   "ESFTCKPT"
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON
//! payload      little-endian f64 blocks at the offsets listed in the header
//! ```
//!
//! Offsets and lengths are in bytes relative to the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MoEModelConfig;
use super::gating::Gating;
use super::lora::attach_lora;
use super::params::GroupId;
use super::transformer::MoEModel;
use crate::autodiff::Tensor;
use crate::error::{input_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"ESFTCKPT";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config: MoEModelConfig,
    lora: Option<LoraHeader>,
    gating: Option<Vec<Gating>>,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoraHeader {
    rank: usize,
    scaling: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    group: GroupId,
    shape: Vec<usize>,
    offset: u64,
    len_bytes: u64,
}

pub fn write_checkpoint<W: Write>(model: &MoEModel, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let len_bytes = 8 * p.value.len() as u64;
            let e = ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset,
                len_bytes,
            };
            offset += len_bytes;
            e
        })
        .collect();
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config().clone(),
        lora: model.lora().map(|l| LoraHeader {
            rank: l.rank,
            scaling: l.scaling,
        }),
        gating: model.grouped_routing().map(<[Gating]>::to_vec),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("checkpoint", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in model.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MoEModel> {
    let io = |e| Error::io("checkpoint", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(input_err!("not a checkpoint (bad magic)"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(input_err!(
            "unsupported checkpoint schema_version {}",
            header.schema_version
        ));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;

    let mut model = MoEModel::new(header.config)?;
    if let Some(l) = &header.lora {
        attach_lora(&mut model, l.rank, l.scaling, 0)?;
    }
    model.set_gating(header.gating);

    if header.params.len() != model.params().len() {
        return Err(input_err!(
            "checkpoint lists {} parameters, config implies {}",
            header.params.len(),
            model.params().len()
        ));
    }
    for (entry, param) in header.params.iter().zip(model.params_mut().iter_mut()) {
        if entry.name != param.name || entry.group != param.group || entry.shape != param.value.shape() {
            return Err(input_err!("checkpoint entry {} does not match the model layout", entry.name));
        }
        let (start, end) = (entry.offset as usize, (entry.offset + entry.len_bytes) as usize);
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| input_err!("checkpoint truncated in {}", entry.name))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        param.value = Tensor::new(entry.shape.clone(), data)?;
    }
    Ok(model)
}

pub fn save(model: &MoEModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load(path: impl AsRef<Path>) -> Result<MoEModel> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MoEModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = MoEModel::new(MoEModelConfig::demo()).unwrap();
        attach_lora(&mut model, 4, 2.0, 9).unwrap();
        // Make B nonzero so adapters are meaningful.
        let b = model.lora().unwrap().adapters[0].b;
        model.param_value_mut(b).data_mut()[0] = -1.0 / 3.0;
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.params().iter().zip(model.params()) {
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn bad_magic() {
        assert!(read_checkpoint(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
