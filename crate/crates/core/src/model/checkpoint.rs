//! `NLCK` checkpoints.
//!
//! Layout: magic `NLCK`, `u16` version, `u32` length + UTF-8 config block
//! (`key = value` lines), `u32` entry count, then per entry a `u32` name
//! length, the name, and an `NLT1` tensor. Entries cover every parameter,
//! every batch-norm running mean (`<layer>.rm`) and variance (`<layer>.rv`),
//! plus any caller-supplied extras such as optimizer state.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FusionMode, FusionSpec, MiniUNetConfig, ModelPair};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLCK";
const VERSION: u16 = 1;

/// A model plus named auxiliary tensors and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelPair,
    pub extras: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

fn config_block(model: &ModelPair, meta: &BTreeMap<String, String>) -> String {
    let c = model.config();
    let chans: Vec<String> = c.in_channels.iter().map(|v| v.to_string()).collect();
    let mut s = format!(
        "in_channels = {}\nbase_width = {}\ndepth = {}\nnum_classes = {}\nfusion = {}\n",
        chans.join(","),
        c.base_width,
        c.depth,
        c.num_classes,
        model.fusion().mode
    );
    for (k, v) in meta {
        s.push_str(&format!("meta.{k} = {v}\n"));
    }
    s
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let block = config_block(model, &ckpt.meta);
    w.write_all(&(block.len() as u32).to_le_bytes())?;
    w.write_all(block.as_bytes())?;

    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for id in model.params().ids() {
        entries.push((model.params().name(id).to_string(), model.params().get(id).clone()));
    }
    for buf in model.bn_buffers() {
        entries.push((format!("{}.rm", buf.name), Tensor::from_vec(buf.running_mean.clone())));
        entries.push((format!("{}.rv", buf.name), Tensor::from_vec(buf.running_var.clone())));
    }
    for (k, v) in &ckpt.extras {
        entries.push((k.clone(), v.clone()));
    }
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in &entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_to(w)?;
    }
    Ok(())
}

fn parse_config(block: &str) -> Result<(MiniUNetConfig, FusionSpec, BTreeMap<String, String>)> {
    let mut kv = BTreeMap::new();
    for line in block.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad config line {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .ok_or_else(|| Error::format(format!("checkpoint config lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(format!("checkpoint config {k} is not an integer")))
    };
    let in_channels = get("in_channels")?
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::format("bad in_channels")))
        .collect::<Result<Vec<usize>>>()?;
    let config = MiniUNetConfig {
        in_channels,
        base_width: num("base_width")?,
        depth: num("depth")?,
        num_classes: num("num_classes")?,
    };
    let fusion = FusionSpec::new(get("fusion")?.parse::<FusionMode>()?);
    let meta = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((config, fusion, meta))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not an NLCK checkpoint"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    if u16::from_le_bytes(ver) != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {}", u16::from_le_bytes(ver))));
    }
    let len = read_u32(r)? as usize;
    let mut block = vec![0u8; len];
    r.read_exact(&mut block)?;
    let block = String::from_utf8(block).map_err(|_| Error::format("config block is not UTF-8"))?;
    let (config, fusion, meta) = parse_config(&block)?;
    // the seed only fixes initial values, all of which are overwritten below
    let mut model = ModelPair::build(config, fusion, 0)?;

    let count = read_u32(r)? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("entry name is not UTF-8"))?;
        let t = Tensor::read_from(r)?;
        entries.insert(name, t);
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let t = entries
            .remove(&name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != model.params().get(id).shape() {
            return Err(Error::format(format!("parameter {name} has shape {:?}", t.shape())));
        }
        *model.params_mut().get_mut(id) = t;
    }
    for buf in model.bn_buffers_mut() {
        for (suffix, dst) in [("rm", &mut buf.running_mean), ("rv", &mut buf.running_var)] {
            let key = format!("{}.{suffix}", buf.name);
            let t = entries
                .remove(&key)
                .ok_or_else(|| Error::format(format!("checkpoint lacks {key}")))?;
            if t.numel() != dst.len() {
                return Err(Error::format(format!("{key} has {} entries", t.numel())));
            }
            *dst = t.into_data();
        }
    }
    Ok(Checkpoint {
        model,
        extras: entries,
        meta,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
