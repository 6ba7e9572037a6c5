//! Binary volume (`TVOL`) and sinogram (`TSIN`) files.
//!
//! Both are little-endian. Samples are stored as f32, so a file read into
//! memory and written again reproduces the same bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, GridSpec};
use crate::volume::{Sinogram, Volume};

pub const VOLUME_MAGIC: &[u8; 4] = b"TVOL";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"TSIN";
pub const FORMAT_VERSION: u16 = 1;

/// What the stored numbers mean. Algorithms always work on the internal
/// scale; Hounsfield data is multiplied by 10⁻³ on import.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueScale {
    #[default]
    Raw,
    HuMilli,
}

impl ValueScale {
    fn code(self) -> u8 {
        match self {
            ValueScale::Raw => 0,
            ValueScale::HuMilli => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ValueScale::Raw),
            1 => Ok(ValueScale::HuMilli),
            _ => Err(Error::Format(format!("unknown value scale {c}"))),
        }
    }
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let version = r.read_u16::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn write_samples(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_f32::<LE>(v as f32)?;
    }
    Ok(())
}

fn read_samples(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LE>(&mut buf)
        .map_err(|e| Error::Format(format!("payload shorter than {n} samples: {e}")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(buf.into_iter().map(f64::from).collect())
}

pub fn write_volume_to(w: &mut impl Write, vol: &Volume, scale: ValueScale) -> Result<()> {
    let g = &vol.grid;
    w.write_all(VOLUME_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u8(g.ndim() as u8)?;
    for d in g.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_u32::<LE>(d)?;
    }
    w.write_f32::<LE>(g.pitch() as f32)?;
    w.write_u8(scale.code())?;
    write_samples(w, &vol.data)
}

pub fn read_volume_from(r: &mut impl Read) -> Result<(Volume, ValueScale)> {
    check_magic(r, VOLUME_MAGIC)?;
    let ndim = r.read_u8()? as usize;
    if !(ndim == 2 || ndim == 3) {
        return Err(Error::Format(format!("volume dimensionality {ndim}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    if ndim == 2 && dims[2] != 1 {
        return Err(Error::Format("2D volume with nz ≠ 1".into()));
    }
    let pitch = r.read_f32::<LE>()? as f64;
    let scale = ValueScale::from_code(r.read_u8()?)?;
    let grid = GridSpec::new(&dims[..ndim], pitch).map_err(|e| Error::Format(e.to_string()))?;
    let data = read_samples(r, grid.len())?;
    Ok((Volume::from_data(grid, data)?, scale))
}

pub fn write_sinogram_to(w: &mut impl Write, sino: &Sinogram) -> Result<()> {
    let geo = sino.geometry.to_toml()?;
    w.write_all(SINOGRAM_MAGIC)?;
    w.write_u16::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(geo.len() as u32)?;
    w.write_all(geo.as_bytes())?;
    write_samples(w, &sino.data)
}

pub fn read_sinogram_from(r: &mut impl Read) -> Result<Sinogram> {
    check_magic(r, SINOGRAM_MAGIC)?;
    let len = r.read_u32::<LE>()? as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("geometry block is not UTF-8".into()))?;
    let geometry = Geometry::from_toml(&text)?;
    let data = read_samples(r, geometry.sinogram_len())?;
    Sinogram::from_data(geometry, data)
}

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume, scale: ValueScale) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume_to(&mut w, vol, scale)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, ValueScale)> {
    read_volume_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_sinogram(path: impl AsRef<Path>, sino: &Sinogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sinogram_to(&mut w, sino)?;
    w.flush()?;
    Ok(())
}

pub fn read_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    read_sinogram_from(&mut BufReader::new(File::open(path)?))
}
