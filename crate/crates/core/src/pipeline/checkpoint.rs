//! `CKP1` checkpoints: magic, u32 length + UTF-8 JSON config, u32 tensor
//! count, then per tensor a u32 length + UTF-8 name and a `TNS1` tensor.
//! Names are written in sorted order. Everything little-endian.

use std::io::{Read, Write};

use super::{check_compatible, PipelineConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{eof_as_format, read_tensor, read_u32, write_tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

fn write_block<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Format("block longer than 4 GiB".into()))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_string<R: Read>(input: &mut R, what: &str) -> Result<String> {
    let len = read_u32(input)? as usize;
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(eof_as_format)?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

pub fn write_checkpoint<W: Write>(out: &mut W, config: &PipelineConfig, params: &ParamStore) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    write_block(out, serde_json::to_string(config)?.as_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_block(out, name.as_bytes())?;
        write_tensor(out, t)?;
    }
    Ok(())
}

/// Reads a checkpoint and checks its tensors against the stored config.
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(PipelineConfig, ParamStore)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(eof_as_format)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let config: PipelineConfig = serde_json::from_str(&read_string(input, "config")?)?;
    config.validate()?;
    let count = read_u32(input)? as usize;
    let mut params = ParamStore::new(config.seed);
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let name = read_string(input, "tensor name")?;
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Format(format!("tensor names out of order at `{name}`")));
        }
        params.set(&name, read_tensor(input)?);
        previous = Some(name);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    check_compatible(&config, &params)?;
    Ok((config, params))
}
