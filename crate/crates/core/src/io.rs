//! Binary volume, mask and tractogram files, and phantom directories.
//!
//! All integers and floats are little-endian. Grids are stored x-fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::sh::n_coeffs;
use crate::field::{Bundle, Mask, Phantom, PhantomSpec, ShVolume};
use crate::geometry::{Grid, Streamline, Vec3};
use crate::oracle::{LabeledSet, Split};

pub const VOLUME_MAGIC: &[u8; 4] = b"SHV1";
pub const MASK_MAGIC: &[u8; 4] = b"MSK1";
pub const TRACT_MAGIC: &[u8; 4] = b"TRX0";

/// Largest grid side accepted when reading.
const MAX_SIDE: u32 = 4096;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(bad(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(())
}

fn write_dims<W: Write>(w: &mut W, dims: [usize; 3]) -> Result<()> {
    for d in dims {
        let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
        w.write_u32::<LE>(d)?;
    }
    Ok(())
}

fn read_dims<R: Read>(r: &mut R) -> Result<[usize; 3]> {
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let v = r.read_u32::<LE>()?;
        if v == 0 || v > MAX_SIDE {
            return Err(bad(format!("grid side {v} out of range")));
        }
        *d = v as usize;
    }
    Ok(dims)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn write_volume<W: Write>(w: &mut W, vol: &ShVolume) -> Result<()> {
    let g = vol.grid();
    w.write_all(VOLUME_MAGIC)?;
    write_dims(w, g.dims)?;
    w.write_u16::<LE>(vol.order() as u16)?;
    w.write_u16::<LE>(g.channels as u16)?;
    for &v in &g.data {
        w.write_f32::<LE>(v as f32)?;
    }
    Ok(())
}

pub fn read_volume<R: Read>(r: &mut R) -> Result<ShVolume> {
    read_magic(r, VOLUME_MAGIC)?;
    let dims = read_dims(r)?;
    let order = r.read_u16::<LE>()? as usize;
    let nc = r.read_u16::<LE>()? as usize;
    if order % 2 != 0 || order > 16 || nc != n_coeffs(order) {
        return Err(bad(format!("SH order {order} with {nc} coefficients")));
    }
    let data = read_f32s(r, dims[0] * dims[1] * dims[2] * nc)?;
    expect_eof(r)?;
    let grid = Grid {
        dims,
        channels: nc,
        data: data.into_iter().map(f64::from).collect(),
    };
    ShVolume::from_grid(grid, order)
}

pub fn write_mask<W: Write>(w: &mut W, m: &Mask) -> Result<()> {
    w.write_all(MASK_MAGIC)?;
    write_dims(w, m.dims())?;
    w.write_all(m.data())?;
    Ok(())
}

pub fn read_mask<R: Read>(r: &mut R) -> Result<Mask> {
    read_magic(r, MASK_MAGIC)?;
    let dims = read_dims(r)?;
    let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
    r.read_exact(&mut data)?;
    if data.iter().any(|&v| v > 1) {
        return Err(bad("mask values must be 0 or 1"));
    }
    expect_eof(r)?;
    Mask::from_data(dims, data)
}

/// Optional per-streamline values stored after the geometry.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Channel {
    #[default]
    None,
    Labels(Vec<bool>),
    Scores(Vec<f32>),
    /// label plus dataset split, as in oracle training sets
    Labeled(Vec<(bool, Split)>),
}

impl Channel {
    fn len(&self) -> Option<usize> {
        match self {
            Channel::None => None,
            Channel::Labels(v) => Some(v.len()),
            Channel::Scores(v) => Some(v.len()),
            Channel::Labeled(v) => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tractogram {
    pub streamlines: Vec<Streamline>,
    pub channel: Channel,
}

impl Tractogram {
    pub fn new(streamlines: Vec<Streamline>) -> Self {
        Tractogram {
            streamlines,
            channel: Channel::None,
        }
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

pub fn write_tractogram<W: Write>(w: &mut W, t: &Tractogram) -> Result<()> {
    if let Some(n) = t.channel.len() {
        if n != t.streamlines.len() {
            return Err(Error::InvalidArgument(format!(
                "channel has {n} values for {} streamlines",
                t.streamlines.len()
            )));
        }
    }
    w.write_all(TRACT_MAGIC)?;
    let n = u32::try_from(t.streamlines.len()).map_err(|_| bad("too many streamlines"))?;
    w.write_u32::<LE>(n)?;
    for s in &t.streamlines {
        let m = u32::try_from(s.len()).map_err(|_| bad("streamline too long"))?;
        w.write_u32::<LE>(m)?;
        for p in s.points() {
            for c in p.to_array() {
                w.write_f32::<LE>(c as f32)?;
            }
        }
    }
    match &t.channel {
        Channel::None => w.write_u8(0)?,
        Channel::Labels(v) => {
            w.write_u8(1)?;
            for &l in v {
                w.write_u8(l as u8)?;
            }
        }
        Channel::Scores(v) => {
            w.write_u8(2)?;
            for &s in v {
                w.write_f32::<LE>(s)?;
            }
        }
        Channel::Labeled(v) => {
            w.write_u8(3)?;
            for &(l, s) in v {
                w.write_u8(l as u8 | split_code(s) << 1)?;
            }
        }
    }
    Ok(())
}

pub fn read_tractogram<R: Read>(r: &mut R) -> Result<Tractogram> {
    read_magic(r, TRACT_MAGIC)?;
    let n = r.read_u32::<LE>()? as usize;
    let mut streamlines = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let m = r.read_u32::<LE>()? as usize;
        let mut pts = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let x = r.read_f32::<LE>()? as f64;
            let y = r.read_f32::<LE>()? as f64;
            let z = r.read_f32::<LE>()? as f64;
            pts.push(Vec3::new(x, y, z));
        }
        streamlines.push(Streamline::new(pts).map_err(|e| bad(format!("streamline {i}: {e}")))?);
    }
    let kind = r.read_u8()?;
    let channel = match kind {
        0 => Channel::None,
        1 => {
            let mut v = vec![0u8; n];
            r.read_exact(&mut v)?;
            if v.iter().any(|&b| b > 1) {
                return Err(bad("labels must be 0 or 1"));
            }
            Channel::Labels(v.into_iter().map(|b| b == 1).collect())
        }
        2 => Channel::Scores(read_f32s(r, n)?),
        3 => {
            let mut v = vec![0u8; n];
            r.read_exact(&mut v)?;
            let recs = v
                .into_iter()
                .map(|b| {
                    let split = match b >> 1 {
                        0 => Split::Train,
                        1 => Split::Val,
                        2 => Split::Test,
                        _ => return Err(bad(format!("bad label byte {b}"))),
                    };
                    Ok((b & 1 == 1, split))
                })
                .collect::<Result<_>>()?;
            Channel::Labeled(recs)
        }
        k => return Err(bad(format!("unknown channel kind {k}"))),
    };
    expect_eof(r)?;
    Ok(Tractogram { streamlines, channel })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_volume(path: &Path, vol: &ShVolume) -> Result<()> {
    let mut w = create(path)?;
    write_volume(&mut w, vol)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<ShVolume> {
    read_volume(&mut open(path)?)
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    let mut w = create(path)?;
    write_mask(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    read_mask(&mut open(path)?)
}

pub fn save_tractogram(path: &Path, t: &Tractogram) -> Result<()> {
    let mut w = create(path)?;
    write_tractogram(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tractogram(path: &Path) -> Result<Tractogram> {
    read_tractogram(&mut open(path)?)
}

pub fn save_labeled(path: &Path, data: &LabeledSet) -> Result<()> {
    let recs = data.labels.iter().copied().zip(data.splits.iter().copied()).collect();
    save_tractogram(
        path,
        &Tractogram {
            streamlines: data.streamlines.clone(),
            channel: Channel::Labeled(recs),
        },
    )
}

pub fn load_labeled(path: &Path) -> Result<LabeledSet> {
    let t = load_tractogram(path)?;
    let Channel::Labeled(recs) = t.channel else {
        return Err(bad(format!("{} holds no labels and splits", path.display())));
    };
    let mut out = LabeledSet::default();
    for (s, (l, split)) in t.streamlines.into_iter().zip(recs) {
        out.push(s, l, split);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleRecord {
    name: String,
    mask: String,
    head: String,
    tail: String,
    centroid: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhantomIndex {
    volume: String,
    tracking_mask: String,
    seeding_mask: String,
    bundles: Vec<BundleRecord>,
    spec: Option<PhantomSpec>,
}

pub const PHANTOM_INDEX: &str = "phantom.json";

/// Writes the volume, masks and ground truth into `dir`, indexed by
/// `phantom.json`.
pub fn save_phantom(dir: &Path, ph: &Phantom, spec: Option<&PhantomSpec>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_volume(&dir.join("volume.shv"), &ph.volume)?;
    save_mask(&dir.join("tracking.msk"), &ph.tracking_mask)?;
    save_mask(&dir.join("seeding.msk"), &ph.seeding_mask)?;
    let mut bundles = Vec::with_capacity(ph.bundles.len());
    for (i, b) in ph.bundles.iter().enumerate() {
        let rec = BundleRecord {
            name: b.name.clone(),
            mask: format!("bundle{i}.msk"),
            head: format!("bundle{i}_head.msk"),
            tail: format!("bundle{i}_tail.msk"),
            centroid: b.centroid.points().iter().map(|p| p.to_array()).collect(),
        };
        save_mask(&dir.join(&rec.mask), &b.mask)?;
        save_mask(&dir.join(&rec.head), &b.head)?;
        save_mask(&dir.join(&rec.tail), &b.tail)?;
        bundles.push(rec);
    }
    let index = PhantomIndex {
        volume: "volume.shv".into(),
        tracking_mask: "tracking.msk".into(),
        seeding_mask: "seeding.msk".into(),
        bundles,
        spec: spec.cloned(),
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| bad(e.to_string()))?;
    std::fs::write(dir.join(PHANTOM_INDEX), text)?;
    Ok(())
}

pub fn load_phantom(dir: &Path) -> Result<Phantom> {
    let text = std::fs::read_to_string(dir.join(PHANTOM_INDEX))?;
    let index: PhantomIndex = serde_json::from_str(&text).map_err(|e| bad(format!("{PHANTOM_INDEX}: {e}")))?;
    let mut bundles = Vec::with_capacity(index.bundles.len());
    for rec in index.bundles {
        let centroid = Streamline::new(rec.centroid.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
            .map_err(|e| bad(format!("bundle {}: {e}", rec.name)))?;
        bundles.push(Bundle {
            mask: load_mask(&dir.join(&rec.mask))?,
            head: load_mask(&dir.join(&rec.head))?,
            tail: load_mask(&dir.join(&rec.tail))?,
            name: rec.name,
            centroid,
        });
    }
    Phantom::from_parts(
        load_volume(&dir.join(&index.volume))?,
        load_mask(&dir.join(&index.tracking_mask))?,
        load_mask(&dir.join(&index.seeding_mask))?,
        bundles,
    )
}
