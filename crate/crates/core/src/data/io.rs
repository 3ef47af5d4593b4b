//! Dataset directories: a TOML `manifest` plus one
//! `loc_<id>.nlds` file per location.
//!
//! `NLDS` layout: magic, `u16` version, `u32` id, height, width, season
//! count and the two channel counts; then per season the two `NLT1` image
//! tensors and `H*W` label bytes; then a segment tag byte `C` followed by
//! the clean label bytes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GroundTruth, Location, NormStats, SceneSpec, Splits};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::smooth::SEASONS;
use crate::tensor::{read_u32, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"NLDS";
const VERSION: u16 = 1;
const CLEAN_SEGMENT: u8 = b'C';
const MANIFEST: &str = "manifest";

/// Everything but the pixel data.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scene: SceneSpec,
    splits: Splits,
    norm1: NormStats,
    norm2: NormStats,
}

fn manifest(ds: &Dataset) -> Result<String> {
    let m = Manifest {
        scene: ds.spec.clone(),
        splits: ds.splits.clone(),
        norm1: ds.norm[0].clone(),
        norm2: ds.norm[1].clone(),
    };
    toml::to_string(&m).map_err(|e| Error::format(format!("manifest: {e}")))
}

fn write_location<W: Write>(w: &mut W, loc: &Location, clean: &LabelMap) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (h, wd) = (clean.height(), clean.width());
    for v in [loc.id, h, wd, loc.images.len(), loc.images[0][0].shape()[0], loc.images[0][1].shape()[0]] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for (imgs, labels) in loc.images.iter().zip(&loc.labels) {
        imgs[0].write_to(w)?;
        imgs[1].write_to(w)?;
        w.write_all(labels.data())?;
    }
    w.write_all(&[CLEAN_SEGMENT])?;
    w.write_all(clean.data())?;
    Ok(())
}

fn read_location<R: Read>(r: &mut R) -> Result<(Location, LabelMap)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format("not an NLDS location file"));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    if u16::from_le_bytes(ver) != VERSION {
        return Err(Error::format(format!("unsupported NLDS version {}", u16::from_le_bytes(ver))));
    }
    let mut head = [0usize; 6];
    for v in &mut head {
        *v = read_u32(r)? as usize;
    }
    let [id, h, w, seasons, c1, c2] = head;
    if seasons != SEASONS {
        return Err(Error::format(format!("location {id} has {seasons} seasons")));
    }
    let read_map = |r: &mut R| -> Result<LabelMap> {
        let mut buf = vec![0u8; h * w];
        r.read_exact(&mut buf)?;
        LabelMap::single(h, w, buf)
    };
    let mut images = Vec::with_capacity(seasons);
    let mut labels = Vec::with_capacity(seasons);
    for _ in 0..seasons {
        let a = Tensor::read_from(r)?;
        let b = Tensor::read_from(r)?;
        if a.shape() != [c1, h, w] || b.shape() != [c2, h, w] {
            return Err(Error::format(format!("location {id} has malformed image tensors")));
        }
        images.push([a, b]);
        labels.push(read_map(r)?);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    if tag[0] != CLEAN_SEGMENT {
        return Err(Error::format(format!("location {id} lacks the clean segment")));
    }
    let clean = read_map(r)?;
    Ok((Location { id, images, labels }, clean))
}

/// Writes `dir/manifest` and one file per location. Refuses to replace an
/// existing manifest unless `force` is set.
pub fn save_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    let mpath = dir.join(MANIFEST);
    if mpath.exists() && !force {
        return Err(Error::config(format!("{} already exists", mpath.display())));
    }
    fs::create_dir_all(dir)?;
    for (i, loc) in ds.locations.iter().enumerate() {
        let mut w = BufWriter::new(File::create(dir.join(format!("loc_{}.nlds", loc.id)))?);
        write_location(&mut w, loc, ds.truth.clean(i))?;
        w.flush()?;
    }
    fs::write(mpath, manifest(ds)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let Manifest {
        scene: spec,
        splits,
        norm1,
        norm2,
    } = toml::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
    spec.validate()?;
    let total = spec.num_locations + spec.num_test;
    let mut locations = Vec::with_capacity(total);
    let mut clean = Vec::with_capacity(total);
    for id in 0..total {
        let path = dir.join(format!("loc_{id}.nlds"));
        let (loc, c) = read_location(&mut BufReader::new(File::open(&path)?))?;
        if loc.id != id || (c.height(), c.width()) != (spec.height, spec.width) {
            return Err(Error::format(format!("{} does not match the manifest", path.display())));
        }
        locations.push(loc);
        clean.push(c);
    }
    Dataset::from_parts(spec, locations, splits, [norm1, norm2], GroundTruth::new(clean))
}
