//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `b"LRCKPT"`, `u16` version, `u32` header length, JSON header (model config
//! and frozen groups), then two tensor sections, base weights followed by
//! LoRA factors. Each section is a `u32` tensor count followed by tensors
//! encoded as `u16` name length, name, `u8` group, `u8` element width (8 for
//! f64, 4 for f32), `u64` rows, `u64` cols, and row-major data.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelState, ParamGroup};
use crate::tensor::Matrix;

const MAGIC: &[u8; 6] = b"LRCKPT";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    frozen: BTreeSet<ParamGroup>,
}

fn write_tensor(out: &mut impl Write, name: &str, group: ParamGroup, m: &Matrix) -> std::io::Result<()> {
    out.write_all(&(name.len() as u16).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[group.as_u8(), 8])?;
    out.write_all(&(m.rows() as u64).to_le_bytes())?;
    out.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), ModelError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header { config: state.config.clone(), frozen: state.frozen().clone() })
        .expect("header serializes");
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for lora_section in [false, true] {
        let members: Vec<usize> =
            (0..state.params.len()).filter(|&i| (state.groups()[i] == ParamGroup::Lora) == lora_section).collect();
        out.write_all(&(members.len() as u32).to_le_bytes())?;
        for i in members {
            write_tensor(&mut out, &state.names()[i], state.groups()[i], &state.params[i])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| ModelError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    if &take::<6>(&mut r)? != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|e| ModelError::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut named = Vec::new();
    for lora_section in [false, true] {
        let count = u32::from_le_bytes(take(&mut r)?);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let [group, width] = take::<2>(&mut r)?;
            let group = ParamGroup::from_u8(group).ok_or_else(|| ModelError::Checkpoint(format!("bad group for `{name}`")))?;
            if (group == ParamGroup::Lora) != lora_section {
                return Err(ModelError::Checkpoint(format!("tensor `{name}` stored in the wrong section")));
            }
            let rows = u64::from_le_bytes(take(&mut r)?) as usize;
            let cols = u64::from_le_bytes(take(&mut r)?) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(match width {
                    8 => f64::from_le_bytes(take(&mut r)?),
                    4 => f32::from_le_bytes(take(&mut r)?) as f64,
                    w => return Err(ModelError::Checkpoint(format!("unsupported element width {w}"))),
                });
            }
            named.push((name, group, Matrix::from_vec(rows, cols, data)));
        }
    }
    ModelState::from_parts(header.config, named, header.frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn checkpoint_round_trip() {
        let mut state = init_model(&ModelConfig { d_model: 16, heads: 2, ff_width: 32, vocab_size: 40, ..Default::default() }).unwrap();
        state.params_mut()[3].data_mut()[0] = 1.25;
        state.set_frozen([ParamGroup::Encoder]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&state, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"LRCKPT\x01").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    }
}
