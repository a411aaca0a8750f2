//! Binary checkpoint format.
//!
//! ```text
//! magic            8 bytes  "NUIGOCKP"
//! format version   u32
//! stages           u32
//! channels         u32
//! inner channels   u32
//! weight sharing   u8
//! params version   u32
//! training step    u64
//! block count      u32
//! blocks:          name (u16 length + UTF-8), rank u8, dims u32 × rank, f32 data
//! ```
//!
//! All integers and floats are little-endian. Parameter blocks are named
//! `param/<tensor>`; optimizer moments, when present, `adam.m/<tensor>` and
//! `adam.v/<tensor>`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::network::{ArchConfig, ModelParams};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"NUIGOCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub optimizer: Option<AdamState>,
}

struct Block {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_block(
    w: &mut impl Write,
    name: &str,
    dims: &[usize],
    data: &[f32],
) -> std::io::Result<()> {
    w.write_u16::<LittleEndian>(name.len() as u16)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(dims.len() as u8)?;
    for &d in dims {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_all(w: &mut impl Write, c: &Checkpoint) -> std::io::Result<()> {
    let arch = c.model.arch;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(arch.stages as u32)?;
    w.write_u32::<LittleEndian>(arch.channels as u32)?;
    w.write_u32::<LittleEndian>(arch.inner_channels as u32)?;
    w.write_u8(arch.weight_sharing as u8)?;
    w.write_u32::<LittleEndian>(c.model.version)?;
    w.write_u64::<LittleEndian>(c.step)?;
    let named = c.model.named_params();
    let blocks = named.len() * if c.optimizer.is_some() { 3 } else { 1 };
    w.write_u32::<LittleEndian>(blocks as u32)?;
    for (name, p) in &named {
        write_block(w, &format!("param/{name}"), &p.shape, &p.data)?;
    }
    if let Some(opt) = &c.optimizer {
        for (i, (name, p)) in named.iter().enumerate() {
            write_block(w, &format!("adam.m/{name}"), &p.shape, &opt.m[i])?;
        }
        for (i, (name, p)) in named.iter().enumerate() {
            write_block(w, &format!("adam.v/{name}"), &p.shape, &opt.v[i])?;
        }
    }
    Ok(())
}

/// Writes through a temporary file and renames it into place, so an
/// interrupted or failed write leaves any previous file untouched.
pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    if let Some(opt) = &c.optimizer {
        if !opt.matches(&c.model) {
            return Err(ck("optimizer state does not match model parameters"));
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let result = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        write_all(&mut w, c)?;
        w.flush()?;
        w.get_ref().sync_all()
    });
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_block(r: &mut impl Read) -> std::io::Result<(String, Block)> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let rank = r.read_u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    let name = String::from_utf8(name).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "non-UTF-8 block name")
    })?;
    Ok((name, Block { dims, data }))
}

fn take_block(blocks: &mut HashMap<String, Block>, key: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let b = blocks
        .remove(key)
        .ok_or_else(|| ck(format!("missing tensor {key}")))?;
    if b.dims != shape {
        return Err(ck(format!(
            "tensor {key} has shape {:?}, architecture expects {:?}",
            b.dims, shape
        )));
    }
    Ok(b.data)
}

/// Reads a checkpoint and validates every tensor against the declared
/// architecture (and against `expected`, when given).
pub fn load_checkpoint(path: &Path, expected: Option<ArchConfig>) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e: std::io::Error| ck(format!("{}: truncated or unreadable ({e})", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(ck(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(ck(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let arch = ArchConfig {
        stages: r.read_u32::<LittleEndian>().map_err(io)? as usize,
        channels: r.read_u32::<LittleEndian>().map_err(io)? as usize,
        inner_channels: r.read_u32::<LittleEndian>().map_err(io)? as usize,
        weight_sharing: r.read_u8().map_err(io)? != 0,
    };
    let params_version = r.read_u32::<LittleEndian>().map_err(io)?;
    let step = r.read_u64::<LittleEndian>().map_err(io)?;
    if let Some(exp) = expected {
        if exp != arch {
            return Err(ck(format!(
                "checkpoint architecture {arch:?} differs from expected {exp:?}"
            )));
        }
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut blocks = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, block) = read_block(&mut r).map_err(io)?;
        blocks.insert(name, block);
    }

    let mut model = ModelParams::<f32>::zeros(arch)?;
    model.version = params_version;
    let mut m = Vec::new();
    let mut v = Vec::new();
    let has_optimizer = blocks.keys().any(|k| k.starts_with("adam."));
    for (name, p) in model.named_params_mut() {
        p.data = take_block(&mut blocks, &format!("param/{name}"), &p.shape)?;
        if has_optimizer {
            m.push(take_block(
                &mut blocks,
                &format!("adam.m/{name}"),
                &p.shape,
            )?);
            v.push(take_block(
                &mut blocks,
                &format!("adam.v/{name}"),
                &p.shape,
            )?);
        }
    }
    if let Some(extra) = blocks.keys().min() {
        return Err(ck(format!(
            "unexpected tensor {extra} for architecture {arch:?}"
        )));
    }
    let optimizer = has_optimizer.then_some(AdamState { step, m, v });
    Ok(Checkpoint {
        model,
        step,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchConfig {
        ArchConfig {
            stages: 2,
            channels: 4,
            inner_channels: 2,
            weight_sharing: false,
        }
    }

    fn model() -> ModelParams<f32> {
        let mut m = ModelParams::zeros(arch()).unwrap();
        for (i, (_, p)) in m.named_params_mut().into_iter().enumerate() {
            for (j, v) in p.data.iter_mut().enumerate() {
                *v = (i * 31 + j) as f32 * 1e-3 - 0.2;
            }
        }
        m
    }

    #[test]
    fn roundtrip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = model();
        let mut opt = AdamState::new(&model);
        opt.step = 12;
        opt.m[3][1] = 0.5;
        opt.v[7][0] = 0.25;
        let c = Checkpoint {
            model,
            step: 12,
            optimizer: Some(opt),
        };
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path, None).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn architecture_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = Checkpoint {
            model: model(),
            step: 0,
            optimizer: None,
        };
        save_checkpoint(&path, &c).unwrap();
        // Patch the header's channel count from 4 to 8.
        let mut bytes = fs::read(&path).unwrap();
        bytes[16..20].copy_from_slice(&8u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err().to_string();
        assert!(err.contains("param/stage0.f1.weight"), "{err}");

        let err = load_checkpoint(&path, Some(arch()))
            .unwrap_err()
            .to_string();
        assert!(err.contains("architecture"), "{err}");
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path, None).is_err());
        let c = Checkpoint {
            model: model(),
            step: 0,
            optimizer: None,
        };
        save_checkpoint(&path, &c).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path, None)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn failed_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        // A directory where the temp file should go makes creation fail.
        let path = dir.path().join("m.ckpt");
        fs::create_dir(path.with_extension("tmp")).unwrap();
        let c = Checkpoint {
            model: model(),
            step: 0,
            optimizer: None,
        };
        assert!(save_checkpoint(&path, &c).is_err());
        assert!(!path.exists());
    }
}
